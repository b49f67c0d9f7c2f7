//! Static SVG line plots of sweep results.

use std::path::Path;

use plotters::prelude::*;
use voxshield::experiment::AblationRow;
use voxshield::{Error, Result};

fn chart_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::invalid(format!("plot {}: {e}", path.display()))
}

/// A single series `(x, y)` with markers; non-finite points are skipped.
pub fn line_plot(path: &Path, title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> Result<()> {
    let pts: Vec<(f64, f64)> = points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    if pts.is_empty() {
        return Ok(());
    }
    voxshield::io::ensure_parent(path)?;
    let span = |vals: Vec<f64>| -> (f64, f64) {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.05).max(1e-9 + lo.abs() * 0.05);
        (lo - pad, hi + pad)
    };
    let (x0, x1) = span(pts.iter().map(|p| p.0).collect());
    let (y0, y1) = span(pts.iter().map(|p| p.1).collect());
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| chart_error(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| chart_error(path, e))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(|e| chart_error(path, e))?;
    chart
        .draw_series(LineSeries::new(pts.iter().copied(), &BLUE))
        .map_err(|e| chart_error(path, e))?;
    chart
        .draw_series(pts.iter().map(|&p| Circle::new(p, 3, BLUE.filled())))
        .map_err(|e| chart_error(path, e))?;
    root.present().map_err(|e| chart_error(path, e))
}

/// One plot per reported metric, named `<stem>_<metric>.svg`.
/// Timing plots are drawn only with `timing`.
pub fn ablation_plots(dir: &Path, stem: &str, axis: &str, rows: &[AblationRow], timing: bool) -> Result<()> {
    let series: [(&str, fn(&AblationRow) -> f64); 6] = [
        ("asv_rate", |r| r.asv_rate),
        ("quality", |r| r.quality),
        ("dsr", |r| r.dsr),
        ("snr", |r| r.snr.unwrap_or(f64::NAN)),
        ("protect_seconds", |r| r.protect_seconds),
        ("clone_seconds", |r| r.clone_seconds),
    ];
    let shown = if timing { series.len() } else { 4 };
    for (name, get) in series.into_iter().take(shown) {
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.value, get(r))).collect();
        line_plot(&dir.join(format!("{stem}_{name}.svg")), &format!("{name} vs {axis}"), axis, name, &pts)?;
    }
    Ok(())
}
