use std::path::{Path, PathBuf};

use branchseg::dataio::SplitRatios;
use branchseg::evalsuite::{Experiment, DEFAULT_COVERAGES, DEFAULT_DECODER_COUNTS, DEFAULT_LAMBDA_GRID};
use branchseg::network::ArchConfig;
use branchseg::synthdata::{SynthConfig, DEFAULT_BG_COVERAGE};
use branchseg::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

/// Which grids `ablate` runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationOptions {
    pub decoders: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub coverages: Vec<f64>,
    pub seeds: Vec<u64>,
    pub decoder_ablation: bool,
    pub coverage_sweep: bool,
    pub comparison: bool,
    /// Run cells concurrently.
    pub parallel: bool,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            decoders: DEFAULT_DECODER_COUNTS.to_vec(),
            lambdas: DEFAULT_LAMBDA_GRID.to_vec(),
            coverages: DEFAULT_COVERAGES.to_vec(),
            seeds: vec![0, 1, 2],
            decoder_ablation: true,
            coverage_sweep: true,
            comparison: true,
            parallel: false,
        }
    }
}

/// The single configuration file shared by every subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    /// Foreground scribble coverage.
    pub coverage: f64,
    pub bg_coverage: f64,
    pub split: SplitRatios,
    pub split_seed: u64,
    pub scribble_seed: u64,
    pub ablation: AblationOptions,
    /// Dataset directory read by `train`, `eval`, `scribble` and, if set, `ablate`.
    pub dataset: Option<PathBuf>,
    /// Checkpoint stem or run directory read by `eval`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = Experiment::default();
        Self {
            synth: e.synth,
            arch: e.arch,
            train: e.train,
            coverage: e.coverage,
            bg_coverage: DEFAULT_BG_COVERAGE,
            split: e.split,
            split_seed: e.split_seed,
            scribble_seed: e.scribble_seed,
            ablation: AblationOptions::default(),
            dataset: None,
            checkpoint: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        if !path.is_file() {
            return Err(Failure::missing(path));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Failure::config(
                if field == "." { String::new() } else { field },
                e.into_inner().to_string(),
            )
        })
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            synth: self.synth.clone(),
            arch: self.arch.clone(),
            train: self.train.clone(),
            coverage: self.coverage,
            bg_coverage: self.bg_coverage,
            split: self.split,
            split_seed: self.split_seed,
            scribble_seed: self.scribble_seed,
        }
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.experiment().validate()?;
        let a = &self.ablation;
        if a.seeds.is_empty() {
            return Err(Failure::config("ablation.seeds", "at least one seed is required"));
        }
        if a.decoders.contains(&0) {
            return Err(Failure::config("ablation.decoders", "decoder counts must be positive"));
        }
        if a.lambdas.iter().chain(&a.coverages).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Failure::config("ablation", "lambdas and coverages must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Writes the resolved configuration as `config.json` inside `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf, Failure> {
        std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
        let path = dir.join("config.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Failure::other(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Failure::io(&path, e))?;
        Ok(path)
    }
}
