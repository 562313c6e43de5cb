//! CSV tables and SVG plots.
//!
//! `ablation.csv`: `axis_decoders,axis_lambda,axis_coverage,seed,miou,best_epoch,wall_seconds`,
//! one row per training run; failed runs leave `miou` and `best_epoch` empty.
//!
//! `comparison.csv`: `method,coverage,miou,gap_to_full`, one row per method
//! with `miou` averaged over seeds.
//!
//! Both files end with `#` comment lines describing the metric.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::ablation::{AblationGrid, ComparisonRow};
use crate::error::{Error, Result};
use crate::trainer::EpochRow;

pub const ABLATION_HEADER: &str = "axis_decoders,axis_lambda,axis_coverage,seed,miou,best_epoch,wall_seconds";
pub const COMPARISON_HEADER: &str = "method,coverage,miou,gap_to_full";

pub const METRIC_FOOTER: &[&str] = &[
    "# miou: mean over test images of the per-image mean of background and foreground IoU",
    "# a class absent from both prediction and ground truth has IoU 1",
];
pub const GAP_FOOTER: &str = "# gap_to_full: 100 * (full - miou) / full, full = base model trained at coverage 1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis_decoders: usize,
    pub axis_lambda: f64,
    pub axis_coverage: f64,
    pub seed: u64,
    pub miou: Option<f64>,
    pub best_epoch: Option<usize>,
    pub wall_seconds: f64,
}

pub fn ablation_rows(grid: &AblationGrid) -> Vec<AblationRow> {
    grid.cells
        .iter()
        .map(|c| AblationRow {
            axis_decoders: c.spec.decoders,
            axis_lambda: c.spec.lambda_main,
            axis_coverage: c.spec.coverage,
            seed: c.spec.seed,
            miou: c.miou,
            best_epoch: c.best_epoch,
            wall_seconds: c.wall_seconds,
        })
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Load {
        file: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_csv<T: Serialize>(path: &Path, header: &str, rows: &[T], footer: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    let body = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    let mut text = format!("{header}\n");
    text.push_str(&String::from_utf8_lossy(&body));
    for line in footer {
        text.push_str(line);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path, header: &str) -> Result<Vec<T>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    if text.lines().next() != Some(header) {
        return Err(Error::Load {
            file: path.to_path_buf(),
            message: format!("expected header {header}"),
        });
    }
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    write_csv(path, ABLATION_HEADER, rows, METRIC_FOOTER)
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>> {
    read_csv(path, ABLATION_HEADER)
}

pub fn write_comparison_csv(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut footer = METRIC_FOOTER.to_vec();
    footer.push(GAP_FOOTER);
    write_csv(path, COMPARISON_HEADER, rows, &footer)
}

pub fn read_comparison_csv(path: &Path) -> Result<Vec<ComparisonRow>> {
    read_csv(path, COMPARISON_HEADER)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    MiouVsDecoders,
    MiouVsCoverage,
    LossCurves,
}

impl PlotKind {
    pub const ALL: [PlotKind; 3] = [PlotKind::MiouVsDecoders, PlotKind::MiouVsCoverage, PlotKind::LossCurves];

    pub fn file_name(self) -> &'static str {
        match self {
            PlotKind::MiouVsDecoders => "miou_vs_decoders.svg",
            PlotKind::MiouVsCoverage => "miou_vs_coverage.svg",
            PlotKind::LossCurves => "loss_curves.svg",
        }
    }
}

/// A named per-epoch training curve.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub label: String,
    pub rows: Vec<EpochRow>,
}

/// Seed-mean mIoU series: label -> sorted (x, mean) points.
type Series = BTreeMap<String, Vec<(f64, f64)>>;

fn seed_means(rows: &[AblationRow], x: impl Fn(&AblationRow) -> f64, label: impl Fn(&AblationRow) -> String) -> Series {
    let mut acc: BTreeMap<String, BTreeMap<u64, (f64, usize)>> = BTreeMap::new();
    for r in rows {
        if let Some(m) = r.miou {
            let e = acc
                .entry(label(r))
                .or_default()
                .entry(x(r).to_bits())
                .or_insert((0.0, 0));
            e.0 += m;
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(k, pts)| {
            let mut v: Vec<(f64, f64)> = pts
                .into_iter()
                .map(|(x, (s, n))| (f64::from_bits(x), s / n as f64))
                .collect();
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            (k, v)
        })
        .collect()
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Invalid(format!("failed to draw {}: {e}", path.display()))
}

fn bounds(series: &Series, default: (f64, f64)) -> (f64, f64) {
    let xs: Vec<f64> = series.values().flatten().map(|p| p.0).collect();
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo.is_finite() && hi > lo {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else if lo.is_finite() {
        (lo - 0.5, lo + 0.5)
    } else {
        default
    }
}

fn draw_series(
    path: &Path,
    title: &str,
    x_desc: &str,
    y_desc: &str,
    series: &Series,
    y_range: (f64, f64),
) -> Result<()> {
    let x_range = bounds(series, (0.0, 1.0));
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(x_range.0..x_range.1, y_range.0..y_range.1)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc(y_desc)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(path, e))?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| plot_err(path, e))?;
    }
    if !series.is_empty() {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| plot_err(path, e))?;
    }
    root.present().map_err(|e| plot_err(path, e))?;
    Ok(())
}

fn miou_range(series: &Series) -> (f64, f64) {
    let ys: Vec<f64> = series.values().flatten().map(|p| p.1).collect();
    let lo = ys.iter().copied().fold(1.0, f64::min);
    let hi = ys.iter().copied().fold(0.0, f64::max);
    if hi > lo {
        let pad = 0.1 * (hi - lo);
        ((lo - pad).max(0.0), (hi + pad).min(1.0))
    } else {
        (0.0, 1.0)
    }
}

pub fn plot_miou_vs_decoders(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let s = seed_means(
        rows,
        |r| r.axis_decoders as f64,
        |r| format!("lambda {} coverage {}", r.axis_lambda, r.axis_coverage),
    );
    draw_series(path, "mIoU vs decoder count", "decoders", "mIoU", &s, miou_range(&s))
}

pub fn plot_miou_vs_coverage(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let s = seed_means(
        rows,
        |r| r.axis_coverage,
        |r| format!("K={} lambda {}", r.axis_decoders, r.axis_lambda),
    );
    draw_series(
        path,
        "mIoU vs annotation coverage",
        "coverage",
        "mIoU",
        &s,
        miou_range(&s),
    )
}

pub fn plot_loss_curves(path: &Path, curves: &[Curve]) -> Result<()> {
    let s: Series = curves
        .iter()
        .map(|c| {
            (
                c.label.clone(),
                c.rows.iter().map(|r| (r.epoch as f64, r.l_total)).collect(),
            )
        })
        .collect();
    let hi = s
        .values()
        .flatten()
        .map(|p| p.1)
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    draw_series(
        path,
        "Training loss",
        "epoch",
        "l_total",
        &s,
        (0.0, if hi > 0.0 { hi * 1.05 } else { 1.0 }),
    )
}

/// Writes `ablation.csv`, `comparison.csv` and the requested plots into `out_dir`.
/// Returns every path written.
pub fn emit_report(
    out_dir: &Path,
    ablation: &[AblationRow],
    comparison: &[ComparisonRow],
    curves: &[Curve],
    plots: &[PlotKind],
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = vec![out_dir.join("ablation.csv"), out_dir.join("comparison.csv")];
    write_ablation_csv(&written[0], ablation)?;
    write_comparison_csv(&written[1], comparison)?;
    for &kind in plots {
        let path = out_dir.join(kind.file_name());
        match kind {
            PlotKind::MiouVsDecoders => plot_miou_vs_decoders(&path, ablation)?,
            PlotKind::MiouVsCoverage => plot_miou_vs_coverage(&path, ablation)?,
            PlotKind::LossCurves => plot_loss_curves(&path, curves)?,
        }
        written.push(path);
    }
    Ok(written)
}
