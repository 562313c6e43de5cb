use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::evaluate;
use crate::dataio::{rescribble, synthetic_dataset, Dataset, SplitRatios};
use crate::error::{Error, Result};
use crate::losses::Regularizer;
use crate::network::{default_dilations, ArchConfig, ModelState};
use crate::rng::stream_seed;
use crate::synthdata::{generate_dataset, SynthConfig, DEFAULT_BG_COVERAGE};
use crate::trainer::{train, EpochRow, TrainConfig};

pub const DEFAULT_LAMBDA_GRID: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
pub const DEFAULT_COVERAGES: [f64; 4] = [0.25, 0.5, 0.75, 1.0];
pub const DEFAULT_DECODER_COUNTS: [usize; 3] = [1, 2, 3];

/// Everything shared by the cells of a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Experiment {
    pub synth: SynthConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub coverage: f64,
    pub bg_coverage: f64,
    pub split: SplitRatios,
    pub split_seed: u64,
    pub scribble_seed: u64,
}

impl Default for Experiment {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            coverage: 0.5,
            bg_coverage: DEFAULT_BG_COVERAGE,
            split: SplitRatios::default(),
            split_seed: 0,
            scribble_seed: 0,
        }
    }
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        for (field, v) in [("coverage", self.coverage), ("bg_coverage", self.bg_coverage)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Generates the synthetic set, splits it and scribbles it at `self.coverage`.
    pub fn dataset(&self) -> Result<Dataset> {
        let pairs = generate_dataset(&self.synth)?;
        synthetic_dataset(
            pairs,
            self.coverage,
            self.bg_coverage,
            self.split,
            self.split_seed,
            self.scribble_seed,
        )
    }

    /// Architecture with `k` decoders; dilation rates are a prefix of the base rates when long enough.
    pub fn arch_with(&self, k: usize) -> ArchConfig {
        let dilation_rates = if self.arch.dilation_rates.len() >= k {
            self.arch.dilation_rates[..k].to_vec()
        } else {
            default_dilations(k)
        };
        ArchConfig {
            n_decoders: k,
            dilation_rates,
            ..self.arch.clone()
        }
    }
}

/// One training run of a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub decoders: usize,
    pub lambda_main: f64,
    pub coverage: f64,
    pub seed: u64,
    pub regularizer: Regularizer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub spec: CellSpec,
    /// Test-split mIoU of the best-validation weights; `None` if the run failed.
    pub miou: Option<f64>,
    pub best_epoch: Option<usize>,
    pub wall_seconds: f64,
    pub error: Option<String>,
    pub curve: Vec<EpochRow>,
}

impl CellResult {
    pub fn failed(&self) -> bool {
        self.miou.is_none()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub cells: Vec<CellResult>,
}

/// Seed-aggregated statistics of the cells sharing a configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub decoders: usize,
    pub lambda_main: f64,
    pub coverage: f64,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    pub n_ok: usize,
    pub n_failed: usize,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

impl AblationGrid {
    /// Rows in first-appearance order of each configuration.
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut order: Vec<(String, usize, u64, u64)> = Vec::new();
        let mut groups: BTreeMap<(String, usize, u64, u64), Vec<&CellResult>> = BTreeMap::new();
        for c in &self.cells {
            let key = (
                c.spec.regularizer.name().to_string(),
                c.spec.decoders,
                c.spec.lambda_main.to_bits(),
                c.spec.coverage.to_bits(),
            );
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(c);
        }
        order
            .into_iter()
            .map(|key| {
                let cells = &groups[&key];
                let ok: Vec<f64> = cells.iter().filter_map(|c| c.miou).collect();
                let (mean, std) = mean_std(&ok);
                AggregateRow {
                    method: key.0.clone(),
                    decoders: key.1,
                    lambda_main: f64::from_bits(key.2),
                    coverage: f64::from_bits(key.3),
                    mean,
                    std,
                    n_ok: ok.len(),
                    n_failed: cells.len() - ok.len(),
                }
            })
            .collect()
    }

    /// Seed-mean mIoU of the cells matching `pred`, ignoring failed cells.
    pub fn mean_where(&self, pred: impl Fn(&CellSpec) -> bool) -> Option<f64> {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| pred(&c.spec))
            .filter_map(|c| c.miou)
            .collect();
        (!v.is_empty()).then(|| mean_std(&v).0)
    }
}

/// Trains and evaluates one cell on a dataset already scribbled at the cell's coverage.
pub fn run_cell(base: &Experiment, data: &Dataset, spec: &CellSpec) -> CellResult {
    let started = Instant::now();
    let outcome = (|| {
        let arch = base.arch_with(spec.decoders);
        let cfg = TrainConfig {
            seed: spec.seed,
            lambda_main: spec.lambda_main,
            regularizer: spec.regularizer,
            ..base.train.clone()
        };
        let model = ModelState::init(arch, stream_seed(spec.seed, "init"))?;
        let out = train(model, data, &cfg, None)?;
        let eval = evaluate(&out.best, &data.test(), cfg.normalize)?;
        Ok::<_, Error>((eval.miou, out.report))
    })();
    let wall_seconds = started.elapsed().as_secs_f64();
    match outcome {
        Ok((miou, report)) => CellResult {
            spec: spec.clone(),
            miou: Some(miou),
            best_epoch: report.best_epoch,
            wall_seconds,
            error: None,
            curve: report.rows,
        },
        Err(e) => CellResult {
            spec: spec.clone(),
            miou: None,
            best_epoch: None,
            wall_seconds,
            error: Some(e.to_string()),
            curve: Vec::new(),
        },
    }
}

/// Background coverage for a sweep point: full coverage is the fully
/// annotated reference, so it labels every background pixel too.
pub fn sweep_bg_coverage(base: &Experiment, coverage: f64) -> f64 {
    if coverage >= 1.0 {
        1.0
    } else {
        base.bg_coverage
    }
}

/// Runs every cell, re-scribbling `data` once per distinct coverage from its
/// full masks. Failed cells are kept and marked.
///
/// With `parallel`, cells run concurrently; each cell is still deterministic.
pub fn run_cells(
    base: &Experiment,
    data: &Dataset,
    specs: &[CellSpec],
    parallel: bool,
    on_cell: &(dyn Fn(&CellResult) + Sync),
) -> Result<AblationGrid> {
    let mut by_coverage: BTreeMap<u64, Dataset> = BTreeMap::new();
    for s in specs {
        if let std::collections::btree_map::Entry::Vacant(e) = by_coverage.entry(s.coverage.to_bits()) {
            e.insert(rescribble(
                data,
                s.coverage,
                sweep_bg_coverage(base, s.coverage),
                base.scribble_seed,
            )?);
        }
    }
    let run = |s: &CellSpec| {
        let r = run_cell(base, &by_coverage[&s.coverage.to_bits()], s);
        on_cell(&r);
        r
    };
    let cells = if parallel {
        specs.par_iter().map(run).collect()
    } else {
        specs.iter().map(run).collect()
    };
    Ok(AblationGrid { cells })
}

pub fn decoder_ablation_specs(base: &Experiment, decoders: &[usize], lambdas: &[f64], seeds: &[u64]) -> Vec<CellSpec> {
    let mut specs = Vec::new();
    for &k in decoders {
        for &lambda_main in lambdas {
            for &seed in seeds {
                specs.push(CellSpec {
                    decoders: k,
                    lambda_main,
                    coverage: base.coverage,
                    seed,
                    regularizer: base.train.regularizer,
                });
            }
        }
    }
    specs
}

pub fn coverage_sweep_specs(base: &Experiment, coverages: &[f64], seeds: &[u64]) -> Vec<CellSpec> {
    let mut specs = Vec::new();
    for &coverage in coverages {
        for &seed in seeds {
            specs.push(CellSpec {
                decoders: base.arch.n_decoders,
                lambda_main: base.train.lambda_main,
                coverage,
                seed,
                regularizer: base.train.regularizer,
            });
        }
    }
    specs
}

/// Decoder count x main-decoder weight grid at the base coverage.
pub fn run_decoder_ablation(
    base: &Experiment,
    data: &Dataset,
    decoders: &[usize],
    lambdas: &[f64],
    seeds: &[u64],
    parallel: bool,
) -> Result<AblationGrid> {
    run_cells(
        base,
        data,
        &decoder_ablation_specs(base, decoders, lambdas, seeds),
        parallel,
        &|_| {},
    )
}

/// Annotation-coverage sweep with the base architecture.
pub fn run_coverage_sweep(
    base: &Experiment,
    data: &Dataset,
    coverages: &[f64],
    seeds: &[u64],
    parallel: bool,
) -> Result<AblationGrid> {
    run_cells(
        base,
        data,
        &coverage_sweep_specs(base, coverages, seeds),
        parallel,
        &|_| {},
    )
}

/// The regularisers compared against shared consistency, each on one decoder.
pub const BASELINES: [Regularizer; 3] = [
    Regularizer::EntropyMin,
    Regularizer::TotalVariation,
    Regularizer::MumfordShah,
];

/// The base model plus every single-decoder baseline at the base coverage,
/// and the base model at full coverage as the reference.
pub fn comparison_specs(base: &Experiment, seeds: &[u64]) -> Vec<CellSpec> {
    let mut specs = Vec::new();
    let ours = |coverage, seed| CellSpec {
        decoders: base.arch.n_decoders,
        lambda_main: base.train.lambda_main,
        coverage,
        seed,
        regularizer: base.train.regularizer,
    };
    for &seed in seeds {
        specs.push(ours(base.coverage, seed));
    }
    for r in BASELINES {
        for &seed in seeds {
            specs.push(CellSpec {
                decoders: 1,
                lambda_main: 1.0,
                coverage: base.coverage,
                seed,
                regularizer: r,
            });
        }
    }
    for &seed in seeds {
        specs.push(ours(1.0, seed));
    }
    specs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub coverage: f64,
    pub miou: f64,
    /// `100 * (full - miou) / full`, where `full` is the reference at coverage 1.
    pub gap_to_full: f64,
}

/// Method rows from a comparison grid. The reference is the base
/// configuration at coverage 1. Rows of the base regulariser with another
/// decoder count are suffixed `_k<count>`.
pub fn comparison_rows(base: &Experiment, grid: &AblationGrid) -> Vec<ComparisonRow> {
    let k = base.arch.n_decoders;
    let full = grid
        .mean_where(|s| s.decoders == k && s.coverage == 1.0 && s.regularizer == base.train.regularizer)
        .unwrap_or(f64::NAN);
    grid.aggregate()
        .into_iter()
        .map(|row| ComparisonRow {
            method: if row.method != base.train.regularizer.name() {
                row.method.clone()
            } else if row.decoders != k {
                format!("{}_k{}", row.method, row.decoders)
            } else if row.coverage == 1.0 {
                format!("{}_full", row.method)
            } else {
                row.method.clone()
            },
            coverage: row.coverage,
            miou: row.mean,
            gap_to_full: 100.0 * (full - row.mean) / full,
        })
        .collect()
}

pub fn run_baseline_comparison(
    base: &Experiment,
    data: &Dataset,
    seeds: &[u64],
    parallel: bool,
) -> Result<(AblationGrid, Vec<ComparisonRow>)> {
    let grid = run_cells(base, data, &comparison_specs(base, seeds), parallel, &|_| {})?;
    let rows = comparison_rows(base, &grid);
    Ok((grid, rows))
}
