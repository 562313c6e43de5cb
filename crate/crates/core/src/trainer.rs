//! Seeded training loop: Adam on the combined objective, per-epoch validation
//! and best-checkpoint selection.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataio::{AugmentConfig, Batch, BatchStream, Dataset, Preprocess};
use crate::error::{Error, Result};
use crate::evalsuite::{evaluate, evaluate_labeled_accuracy};
use crate::losses::{sample_step_weights, LossBreakdown, MixWeights, Objective, Regularizer};
use crate::network::checkpoint::{self, Manifest};
use crate::network::{Gradients, Mode, ModelState, ParamStore};
use crate::rng::{named_rng, Rng};

pub const METRICS_HEADER: &str = "epoch,l_sup,l_cons,l_total,val_miou,seconds";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning rate as a function of the (1-based) epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Multiply by `factor` every `every` epochs.
    Step { every: usize, factor: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Step { every, factor } => base * factor.powi((epoch.saturating_sub(1) / every.max(1)) as i32),
        }
    }
}

/// What the per-epoch validation score measures.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValMetric {
    /// Main-decoder mIoU against full masks, falling back to labeled-pixel
    /// accuracy when any validation sample lacks one.
    #[default]
    Auto,
    LabeledAccuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub lambda_main: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Min-max normalise every input image before augmentation.
    pub normalize: bool,
    pub regularizer: Regularizer,
    pub lr_schedule: LrSchedule,
    /// Linear ramp of gamma from 0 over this many epochs; 0 disables it.
    pub gamma_rampup_epochs: usize,
    pub adam: AdamConfig,
    pub val_metric: ValMetric,
    /// Write epoch wall time into `metrics.csv`; off gives byte-identical files.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 200,
            gamma: 0.5,
            lambda_main: 0.5,
            seed: 0,
            augment: AugmentConfig::default(),
            normalize: true,
            regularizer: Regularizer::default(),
            lr_schedule: LrSchedule::Constant,
            gamma_rampup_epochs: 0,
            adam: AdamConfig::default(),
            val_metric: ValMetric::Auto,
            record_timing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be finite and nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("train.gamma", "must be finite and nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.lambda_main) {
            return Err(Error::config("train.lambda_main", "must lie in [0, 1]"));
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            return Err(Error::config(
                "train.adam",
                "betas must lie in [0, 1) and eps must be positive",
            ));
        }
        if let LrSchedule::Step { every, factor } = self.lr_schedule {
            if every == 0 || !(factor > 0.0) {
                return Err(Error::config("train.lr_schedule", "needs every >= 1 and factor > 0"));
            }
        }
        self.augment.validate()
    }

    pub fn gamma_at(&self, epoch: usize) -> f64 {
        if self.gamma_rampup_epochs == 0 {
            self.gamma
        } else {
            self.gamma * (epoch as f64 / self.gamma_rampup_epochs as f64).min(1.0)
        }
    }

    fn preprocess(&self) -> Preprocess {
        Preprocess {
            normalize: self.normalize,
            augment: Some(self.augment.clone()),
        }
    }
}

/// First and second moment estimates for every parameter block.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.blocks.iter().map(|b| vec![0.0; b.data.len()]).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let step = (lr * bc2.sqrt() / bc1) as f32;
        let eps_hat = (eps * bc2.sqrt()) as f32;
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        for (id, block) in params.blocks.iter_mut().enumerate() {
            let g = grads.data(id);
            for (((w, &g), m), v) in block.data.iter_mut().zip(g).zip(&mut self.m[id]).zip(&mut self.v[id]) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step * *m / (v.sqrt() + eps_hat);
            }
        }
    }
}

/// Random streams consumed by a training step.
pub struct StepRngs {
    pub lambda: Rng,
    pub dropout: Rng,
}

impl StepRngs {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            lambda: named_rng(seed, "lambda"),
            dropout: named_rng(seed, "dropout"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub batch: usize,
    pub weights: MixWeights,
    pub loss: LossBreakdown,
}

/// A model with its optimiser state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ModelState,
    pub adam: Adam,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(mut model: ModelState, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.set_training(true);
        let adam = Adam::new(config.adam, model.params());
        Ok(Self { model, adam, config })
    }

    /// Batch loss and parameter gradients, without updating anything.
    ///
    /// Each image's loss is averaged over the batch.
    pub fn loss_and_gradients(
        &self,
        batch: &Batch,
        weights: &MixWeights,
        gamma: f64,
        dropout_rng: &mut Rng,
    ) -> Result<(LossBreakdown, Gradients)> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let objective = Objective {
            gamma,
            regularizer: self.config.regularizer,
        };
        let mode = if self.model.is_training() {
            Mode::Train
        } else {
            Mode::Eval
        };
        let k = self.model.n_decoders();
        let mut grads = Gradients::zeros_like(self.model.params());
        let (mut l_sup, mut l_cons) = (0.0, 0.0);
        for (image, ann) in batch.images.iter().zip(&batch.annotations) {
            image.dims.ensure_eq(ann.dims)?;
            let tape = self.model.forward_tape(image, mode, k, dropout_rng)?;
            let (loss, dlogits) = objective.evaluate(tape.logits(), ann, image, weights)?;
            l_sup += loss.l_sup;
            l_cons += loss.l_cons;
            self.model.backward(&tape, &dlogits, &mut grads);
        }
        let b = batch.len() as f64;
        let scale = (1.0 / b) as f32;
        for block in &mut grads.blocks {
            block.iter_mut().for_each(|g| *g *= scale);
        }
        Ok((LossBreakdown::compose(l_sup / b, l_cons / b, gamma), grads))
    }

    /// One optimiser iteration: fresh mixing weights, forward and backward
    /// through all decoders, one Adam update.
    pub fn step(&mut self, batch: &Batch, rngs: &mut StepRngs, epoch: usize) -> Result<(LossBreakdown, MixWeights)> {
        let weights = sample_step_weights(self.model.n_decoders(), self.config.lambda_main, &mut rngs.lambda)?;
        let gamma = self.config.gamma_at(epoch);
        let (loss, grads) = self.loss_and_gradients(batch, &weights, gamma, &mut rngs.dropout)?;
        if !loss.is_finite() {
            return Err(non_finite(epoch, 0, &loss));
        }
        let lr = self.config.lr_schedule.rate(self.config.learning_rate, epoch);
        self.adam.update(self.model.params_mut(), &grads, lr);
        Ok((loss, weights))
    }
}

fn non_finite(epoch: usize, batch: usize, loss: &LossBreakdown) -> Error {
    Error::NonFinite {
        epoch,
        batch,
        l_sup: loss.l_sup,
        l_cons: loss.l_cons,
        l_total: loss.l_total,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub l_sup: f64,
    pub l_cons: f64,
    pub l_total: f64,
    pub val_miou: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    pub best_epoch: Option<usize>,
    pub best_val_miou: Option<f64>,
    /// `"miou"` or `"labeled_accuracy"`.
    pub val_metric: String,
    /// Stem of the best checkpoint (`.bin` and `.json`), when one was written.
    pub checkpoint: Option<PathBuf>,
    pub steps: Vec<StepRecord>,
}

impl TrainReport {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.l_sup, r.l_cons, r.l_total, r.val_miou, r.seconds
            );
        }
        out
    }
}

/// Parses a `metrics.csv` written by [`train`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochRow>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let load_err = |message: String| Error::Load {
        file: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path)?;
    if text.lines().next() != Some(METRICS_HEADER) {
        return Err(load_err(format!("expected header {METRICS_HEADER}")));
    }
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| load_err(e.to_string())))
        .collect()
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub report: TrainReport,
    /// Weights from the best validation epoch (the initial weights if no epoch ran).
    pub best: ModelState,
    /// Weights after the last epoch.
    pub last: ModelState,
}

/// Validation score of the main decoder and the metric name used.
pub fn validate_model(model: &ModelState, data: &Dataset, cfg: &TrainConfig) -> Result<(f64, &'static str)> {
    let val = data.val();
    if val.is_empty() {
        return Err(Error::config("split.val", "the validation split is empty"));
    }
    let full = val.iter().all(|s| s.full_mask.is_some());
    if cfg.val_metric == ValMetric::Auto && full {
        Ok((evaluate(model, &val, cfg.normalize)?.miou, "miou"))
    } else {
        Ok((
            evaluate_labeled_accuracy(model, &val, cfg.normalize)?,
            "labeled_accuracy",
        ))
    }
}

/// Trains on the train split, validating each epoch on the val split.
///
/// With `out_dir`, writes `metrics.csv` after every epoch and keeps the best
/// checkpoint at `out_dir/best.{bin,json}`.
pub fn train(model: ModelState, data: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set = data.train();
    if cfg.epochs > 0 && train_set.is_empty() {
        return Err(Error::config("split.train", "the training split is empty"));
    }
    for s in train_set.iter().chain(data.val().iter()) {
        model.check_input(s.image.dims)?;
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let metrics_path = out_dir.map(|d| d.join("metrics.csv"));
    let stem = out_dir.map(|d| d.join("best"));

    let mut trainer = Trainer::new(model.clone(), cfg.clone())?;
    let mut best = model;
    let mut report = TrainReport {
        rows: Vec::new(),
        best_epoch: None,
        best_val_miou: None,
        val_metric: String::new(),
        checkpoint: None,
        steps: Vec::new(),
    };
    let mut order_rng = named_rng(cfg.seed, "data_order");
    let mut augment_rng = named_rng(cfg.seed, "augment");
    let mut rngs = StepRngs::from_seed(cfg.seed);

    if let Some(p) = &metrics_path {
        std::fs::write(p, report.metrics_csv())?;
    }
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        trainer.model.set_training(true);
        let stream = BatchStream::new(
            train_set.clone(),
            cfg.batch_size,
            Some(&mut order_rng),
            cfg.preprocess(),
            &mut augment_rng,
        )?;
        let (mut sup, mut cons, mut n) = (0.0, 0.0, 0usize);
        for (b, batch) in stream.enumerate() {
            let (loss, weights) = trainer.step(&batch, &mut rngs, epoch).map_err(|e| match e {
                Error::NonFinite {
                    l_sup, l_cons, l_total, ..
                } => Error::NonFinite {
                    epoch,
                    batch: b,
                    l_sup,
                    l_cons,
                    l_total,
                },
                other => other,
            })?;
            if !trainer.model.params().all_finite() {
                return Err(non_finite(epoch, b, &loss));
            }
            sup += loss.l_sup;
            cons += loss.l_cons;
            n += 1;
            report.steps.push(StepRecord {
                epoch,
                batch: b,
                weights,
                loss,
            });
        }
        trainer.model.set_training(false);
        let (score, metric) = validate_model(&trainer.model, data, cfg)?;
        report.val_metric = metric.to_string();
        let mean = LossBreakdown::compose(sup / n as f64, cons / n as f64, cfg.gamma_at(epoch));
        let seconds = if cfg.record_timing {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        report.rows.push(EpochRow {
            epoch,
            l_sup: mean.l_sup,
            l_cons: mean.l_cons,
            l_total: mean.l_total,
            val_miou: score,
            seconds,
        });
        if report.best_val_miou.is_none_or(|b| score > b) {
            report.best_val_miou = Some(score);
            report.best_epoch = Some(epoch);
            best = trainer.model.clone();
            if let Some(stem) = &stem {
                let manifest = Manifest {
                    arch: best.config().clone(),
                    seed: cfg.seed,
                    epoch,
                    val_miou: score,
                    val_metric: metric.to_string(),
                    normalize: cfg.normalize,
                    blocks: Vec::new(),
                };
                checkpoint::save(stem, &best, &manifest)?;
                report.checkpoint = Some(stem.clone());
            }
        }
        if let Some(p) = &metrics_path {
            std::fs::write(p, report.metrics_csv())?;
        }
    }
    best.set_training(false);
    let mut last = trainer.model;
    last.set_training(false);
    Ok(TrainOutcome { report, best, last })
}
