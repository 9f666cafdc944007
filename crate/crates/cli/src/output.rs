use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{runtime, CliError};

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(runtime)?;
    for r in rows {
        w.serialize(r).map_err(runtime)?;
    }
    w.flush().map_err(runtime)
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn draw(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<(), Box<dyn std::error::Error>> {
    let all: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|p| p.0.is_finite() && p.1.is_finite())
        .collect();
    if all.is_empty() {
        return Err("nothing to plot".into());
    }
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for (x, y) in &all {
        (x0, x1, y0, y1) = (x0.min(*x), x1.max(*x), y0.min(*y), y1.max(*y));
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(
                s.points.iter().copied(),
                color.stroke_width(2),
            ))?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        chart.draw_series(s.points.iter().map(|&p| Circle::new(p, 3, color.filled())))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    Ok(())
}

/// Plots are derived from the CSVs; a failure is reported and skipped.
pub fn plot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Option<PathBuf> {
    match draw(path, title, x_label, y_label, series) {
        Ok(()) => Some(path.to_path_buf()),
        Err(e) => {
            eprintln!("warning: plot {} skipped: {e}", path.display());
            None
        }
    }
}

#[derive(Serialize)]
struct RunManifest<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    config_sha256: String,
    seed: Option<u64>,
    workers: Option<usize>,
    config: &'a C,
    outputs: Vec<String>,
}

/// `run.json` next to the outputs: effective configuration, hash of the
/// configuration file as given, and the files written.
pub fn write_manifest<C: Serialize>(
    out: &Path,
    command: &str,
    raw: &[u8],
    overrides: &crate::Overrides,
    config: &C,
    outputs: &[PathBuf],
) -> Result<(), CliError> {
    let hash = Sha256::digest(raw);
    let manifest = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: hash.iter().map(|b| format!("{b:02x}")).collect(),
        seed: overrides.seed,
        workers: overrides.workers,
        config,
        outputs: outputs
            .iter()
            .filter_map(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(runtime)?;
    fs::write(out.join("run.json"), text).map_err(runtime)
}
