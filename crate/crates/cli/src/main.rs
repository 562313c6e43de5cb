mod config;
mod failure;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use branchseg::dataio::{load_dataset, rescribble, save_dataset, Dataset};
use branchseg::evalsuite::{
    ablation_rows, comparison_rows, comparison_specs, coverage_sweep_specs, decoder_ablation_specs, emit_report,
    evaluate, read_ablation_csv, read_comparison_csv, run_cells, AblationGrid, AblationRow, CellResult, ComparisonRow,
    Curve, PlotKind,
};
use branchseg::network::{checkpoint, ModelState};
use branchseg::rng::stream_seed;
use branchseg::trainer::{read_metrics_csv, train};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use config::RunConfig;
use failure::Failure;

#[derive(Parser, Debug)]
#[command(
    name = "branchseg",
    version,
    about = "Scribble-supervised segmentation with a multi-decoder U-Net"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed the command consumes.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with masks, scribbles and a split.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Regenerate scribbles from the full masks, in place.
    Scribble {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; defaults to the configured dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Fraction of foreground pixels to label.
        #[arg(long)]
        coverage: Option<f64>,
        /// Fraction of background pixels to label.
        #[arg(long)]
        bg_coverage: Option<f64>,
    },
    /// Train a model; writes metrics.csv and the best checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; defaults to the configured dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint stem or the run directory holding `best.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory; defaults to the configured dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run the configured ablation grids and write the report.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Merge run directories into one report.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directories holding ablation.csv, comparison.csv or metrics.csv.
        runs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().to_string();
            eprintln!("{}", Failure::config("args", first));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.code as u8)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Synth { common } => cmd_synth(&common),
        Command::Scribble {
            common,
            dataset,
            coverage,
            bg_coverage,
        } => cmd_scribble(&common, dataset, coverage, bg_coverage),
        Command::Train { common, dataset } => cmd_train(&common, dataset),
        Command::Eval {
            common,
            checkpoint,
            dataset,
        } => cmd_eval(&common, checkpoint, dataset),
        Command::Ablate { common } => cmd_ablate(&common),
        Command::Report { common, runs } => cmd_report(&common, &runs),
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    cfg.validate()?;
    Ok(cfg)
}

fn required(value: Option<PathBuf>, field: &str) -> Result<PathBuf, Failure> {
    value.ok_or_else(|| Failure::config(field, "required (flag or config)"))
}

fn dataset_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, Failure> {
    required(flag.or_else(|| cfg.dataset.clone()), "dataset")
}

fn print_summary(value: serde_json::Value) {
    println!("{value}");
}

fn cmd_synth(common: &Common) -> Result<(), Failure> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.synth.seed = seed;
        cfg.split_seed = seed;
        cfg.scribble_seed = seed;
    }
    let out = required(common.out.clone(), "out")?;
    let data = cfg.experiment().dataset()?;
    save_dataset(&out, &data)?;
    cfg.dataset = Some(out.clone());
    cfg.write_resolved(&out)?;
    print_summary(json!({
        "command": "synth",
        "dataset": out,
        "train": data.split.train.len(),
        "val": data.split.val.len(),
        "test": data.split.test.len(),
    }));
    Ok(())
}

fn cmd_scribble(
    common: &Common,
    dataset: Option<PathBuf>,
    coverage: Option<f64>,
    bg_coverage: Option<f64>,
) -> Result<(), Failure> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.scribble_seed = seed;
    }
    if let Some(c) = coverage {
        cfg.coverage = c;
    }
    if let Some(c) = bg_coverage {
        cfg.bg_coverage = c;
    }
    cfg.validate()?;
    let dir = dataset_dir(dataset, &cfg)?;
    let data = load_dataset(&dir)?;
    let scribbled = rescribble(&data, cfg.coverage, cfg.bg_coverage, cfg.scribble_seed)?;
    save_dataset(&dir, &scribbled)?;
    cfg.dataset = Some(dir.clone());
    cfg.write_resolved(common.out.as_deref().unwrap_or(&dir))?;
    print_summary(json!({"command": "scribble", "dataset": dir, "coverage": cfg.coverage}));
    Ok(())
}

fn cmd_train(common: &Common, dataset: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    let dir = dataset_dir(dataset, &cfg)?;
    let out = required(common.out.clone(), "out")?;
    let data = load_dataset(&dir)?;
    cfg.dataset = Some(dir);
    cfg.write_resolved(&out)?;
    let model = ModelState::init(cfg.arch.clone(), stream_seed(cfg.train.seed, "init"))?;
    let outcome = train(model, &data, &cfg.train, Some(&out))?;
    let r = &outcome.report;
    print_summary(json!({
        "command": "train",
        "epochs": r.rows.len(),
        "best_epoch": r.best_epoch,
        "best_val": r.best_val_miou,
        "val_metric": r.val_metric,
        "checkpoint": r.checkpoint,
    }));
    Ok(())
}

fn checkpoint_stem(path: PathBuf) -> PathBuf {
    if path.is_dir() {
        path.join("best")
    } else if path.extension().is_some_and(|e| e == "json" || e == "bin") {
        path.with_extension("")
    } else {
        path
    }
}

fn cmd_eval(common: &Common, ckpt: Option<PathBuf>, dataset: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = load_config(common)?;
    let stem = checkpoint_stem(required(ckpt.or_else(|| cfg.checkpoint.clone()), "checkpoint")?);
    let dir = dataset_dir(dataset, &cfg)?;
    let (model, manifest) = checkpoint::load(&stem)?;
    let data = load_dataset(&dir)?;
    let samples = if data.split.test.is_empty() {
        data.samples().iter().collect()
    } else {
        data.test()
    };
    let result = evaluate(&model, &samples, manifest.normalize)?;
    if let Some(out) = &common.out {
        cfg.dataset = Some(dir);
        cfg.checkpoint = Some(stem.clone());
        cfg.write_resolved(out)?;
        let mut text = String::from("id,iou_background,iou_foreground,miou\n");
        for s in &result.per_image {
            text.push_str(&format!(
                "{},{},{},{}\n",
                s.id, s.iou.per_class[0], s.iou.per_class[1], s.iou.mean
            ));
        }
        text.push_str(
            "# miou: per-image mean of background and foreground IoU; a class absent from both masks has IoU 1\n",
        );
        text.push_str(&format!("# dataset miou (mean over images): {}\n", result.miou));
        let path = out.join("eval.csv");
        std::fs::write(&path, text).map_err(|e| Failure::io(&path, e))?;
        let path = out.join("eval.json");
        std::fs::write(&path, serde_json::to_string_pretty(&result).unwrap_or_default())
            .map_err(|e| Failure::io(&path, e))?;
    }
    print_summary(json!({
        "command": "eval",
        "checkpoint": stem,
        "miou": result.miou,
        "iou_foreground": result.class_mean(1),
        "n_images": result.n_images,
    }));
    Ok(())
}

fn ablation_dataset(cfg: &RunConfig) -> Result<Dataset, Failure> {
    match &cfg.dataset {
        Some(dir) => Ok(load_dataset(dir)?),
        None => Ok(cfg.experiment().dataset()?),
    }
}

fn curves(cells: &[CellResult]) -> Vec<Curve> {
    cells
        .iter()
        .filter(|c| !c.curve.is_empty())
        .map(|c| Curve {
            label: format!(
                "{} K={} lambda={} cov={} seed={}",
                c.spec.regularizer.name(),
                c.spec.decoders,
                c.spec.lambda_main,
                c.spec.coverage,
                c.spec.seed
            ),
            rows: c.curve.clone(),
        })
        .collect()
}

fn cmd_ablate(common: &Common) -> Result<(), Failure> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        let n = cfg.ablation.seeds.len() as u64;
        cfg.ablation.seeds = (seed..seed + n).collect();
    }
    let out = required(common.out.clone(), "out")?;
    cfg.write_resolved(&out)?;
    let base = cfg.experiment();
    let data = ablation_dataset(&cfg)?;
    let opts = &cfg.ablation;
    let progress = |c: &CellResult| {
        let status = match c.miou {
            Some(m) => format!("miou={m}"),
            None => format!("failed: {}", c.error.as_deref().unwrap_or("")),
        };
        eprintln!(
            "cell {} K={} lambda={} coverage={} seed={} {status}",
            c.spec.regularizer.name(),
            c.spec.decoders,
            c.spec.lambda_main,
            c.spec.coverage,
            c.spec.seed
        );
    };
    let mut grid = AblationGrid::default();
    if opts.decoder_ablation {
        let specs = decoder_ablation_specs(&base, &opts.decoders, &opts.lambdas, &opts.seeds);
        grid.cells
            .extend(run_cells(&base, &data, &specs, opts.parallel, &progress)?.cells);
    }
    if opts.coverage_sweep {
        let specs = coverage_sweep_specs(&base, &opts.coverages, &opts.seeds);
        grid.cells
            .extend(run_cells(&base, &data, &specs, opts.parallel, &progress)?.cells);
    }
    let mut comparison = Vec::new();
    let mut all_cells = grid.cells.clone();
    if opts.comparison {
        let specs = comparison_specs(&base, &opts.seeds);
        let cgrid = run_cells(&base, &data, &specs, opts.parallel, &progress)?;
        comparison = comparison_rows(&base, &cgrid);
        all_cells.extend(cgrid.cells);
    }
    let cells_path = out.join("cells.json");
    std::fs::write(
        &cells_path,
        serde_json::to_string_pretty(&all_cells).unwrap_or_default(),
    )
    .map_err(|e| Failure::io(&cells_path, e))?;
    let written = emit_report(
        &out,
        &ablation_rows(&grid),
        &comparison,
        &curves(&all_cells),
        &PlotKind::ALL,
    )?;
    print_summary(json!({
        "command": "ablate",
        "cells": all_cells.len(),
        "failed": all_cells.iter().filter(|c| c.failed()).count(),
        "files": written,
    }));
    Ok(())
}

fn cmd_report(common: &Common, runs: &[PathBuf]) -> Result<(), Failure> {
    let mut cfg = load_config(common)?;
    let out = required(common.out.clone(), "out")?;
    let mut ablation: Vec<AblationRow> = Vec::new();
    let mut comparison: Vec<ComparisonRow> = Vec::new();
    let mut curves = Vec::new();
    for dir in runs {
        if !dir.is_dir() {
            return Err(Failure::missing(dir));
        }
        let mut found = false;
        let path = dir.join("ablation.csv");
        if path.is_file() {
            ablation.extend(read_ablation_csv(&path)?);
            found = true;
        }
        let path = dir.join("comparison.csv");
        if path.is_file() {
            comparison.extend(read_comparison_csv(&path)?);
            found = true;
        }
        let path = dir.join("metrics.csv");
        if path.is_file() {
            curves.push(Curve {
                label: run_label(dir),
                rows: read_metrics_csv(&path)?,
            });
            found = true;
        }
        if !found {
            return Err(Failure::input(format!(
                "{} holds no ablation.csv, comparison.csv or metrics.csv",
                dir.display()
            )));
        }
    }
    cfg.dataset = None;
    cfg.write_resolved(&out)?;
    let written = emit_report(&out, &ablation, &comparison, &curves, &PlotKind::ALL)?;
    print_summary(json!({"command": "report", "runs": runs.len(), "files": written}));
    Ok(())
}

fn run_label(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}
