//! AdamW training with per-epoch checkpoints and early stopping on
//! validation F1.

mod checkpoint;
mod optimizer;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{self, EvalError, EvalReport};
use crate::model::{Mode, ModelError, ModelState};
use crate::seed;
use crate::tokenizer::TokenBatch;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CheckpointError, MANIFEST};
pub use optimizer::{adamw_step, OptimizerState};

pub const HISTORY_FILE: &str = "history.csv";
pub const BEST_DIR: &str = "best";

pub fn epoch_dir_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}")
}

/// Validation metric that drives early stopping and best-checkpoint selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Monitor {
    #[default]
    Micro,
    Macro,
}

impl Monitor {
    pub fn value(self, report: &EvalReport) -> f64 {
        match self {
            Monitor::Micro => report.micro.f1,
            Monitor::Macro => report.macro_avg.f1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub monitor: Monitor,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            weight_decay: 0.01,
            betas: [0.9, 0.999],
            eps: 1e-8,
            batch_size: 32,
            eval_batch_size: 64,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            monitor: Monitor::Micro,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return bad(format!("betas must lie in (0, 1), got {:?}", self.betas));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return bad("max_epochs and patience must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("no gradient for parameter {0}")]
    MissingGradient(String),
    #[error("gradient or moment shape differs from parameter {0}")]
    GradientShape(String),
    #[error("non-finite gradient for {param} at step {step}; set NEWSBENCH_DEBUG=1 to locate the first bad op")]
    NonFiniteGradient { param: String, step: u64 },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    /// Writing an artifact failed; `history` holds every completed epoch.
    #[error("writing training artifacts failed after {} epochs: {source}", history.records.len())]
    Artifact {
        source: CheckpointError,
        history: Box<TrainHistory>,
    },
}

/// Keeps the best monitored value and counts epochs without strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records one epoch; returns true when it is a new best.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        match self.best {
            Some((_, b)) if !(value > b) => {
                self.since_best += 1;
                false
            }
            _ => {
                self.best = Some((epoch, value));
                self.since_best = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|b| b.0)
    }

    pub fn best_value(&self) -> Option<f64> {
        self.best.map(|b| b.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Monitored F1 (micro or macro per the config).
    pub val_f1: f64,
    pub val_precision: f64,
    pub val_recall: f64,
    pub val_macro_f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    /// True when patience ran out before `max_epochs`.
    pub early_stopped: bool,
}

impl TrainHistory {
    pub fn write_csv(&self, out: impl io::Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(input: impl io::Read) -> csv::Result<Vec<EpochRecord>> {
        csv::Reader::from_reader(input).deserialize().collect()
    }
}

/// Where per-epoch artifacts go and whether to continue a previous run.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// `epoch_XXX/`, `best/` and `history.csv` are written here when set.
    pub run_dir: Option<PathBuf>,
    pub resume: bool,
    pub vocab_sha256: Option<String>,
}

pub struct TrainData<'a> {
    pub train: &'a TokenBatch,
    pub validation: &'a TokenBatch,
    pub labels: &'a [String],
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: TrainHistory,
}

fn artifact_err(history: &TrainHistory) -> impl FnOnce(CheckpointError) -> TrainError + '_ {
    move |source| TrainError::Artifact {
        source,
        history: Box::new(history.clone()),
    }
}

fn io_artifact(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_owned(),
        source,
    }
}

fn write_history(dir: &Path, history: &TrainHistory) -> Result<(), CheckpointError> {
    let path = dir.join(HISTORY_FILE);
    let file = fs::File::create(&path).map_err(io_artifact(&path))?;
    history
        .write_csv(file)
        .map_err(|e| io_artifact(&path)(io::Error::other(e)))
}

/// Clears artifacts of an earlier run so a fresh run does not mix with them.
fn clear_run_dir(dir: &Path) -> Result<(), CheckpointError> {
    if !dir.exists() {
        return fs::create_dir_all(dir).map_err(io_artifact(dir));
    }
    for entry in fs::read_dir(dir).map_err(io_artifact(dir))? {
        let entry = entry.map_err(io_artifact(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let path = entry.path();
        if name.starts_with("epoch_") || name == BEST_DIR {
            fs::remove_dir_all(&path).map_err(io_artifact(&path))?;
        } else if name == HISTORY_FILE {
            fs::remove_file(&path).map_err(io_artifact(&path))?;
        }
    }
    Ok(())
}

struct ResumePoint {
    model: ModelState<f32>,
    optimizer: OptimizerState<f32>,
    best: Checkpoint,
    records: Vec<EpochRecord>,
}

fn find_resume_point(dir: &Path) -> Result<Option<ResumePoint>, TrainError> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(None);
    };
    let latest = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_prefix("epoch_")?.parse::<usize>().ok())
        .filter(|&n| dir.join(epoch_dir_name(n)).join(MANIFEST).exists())
        .max();
    let Some(epoch) = latest else {
        return Ok(None);
    };
    let resume = |e: CheckpointError| TrainError::Resume(e.to_string());
    let last = load_checkpoint(dir.join(epoch_dir_name(epoch))).map_err(resume)?;
    let optimizer = last
        .optimizer
        .ok_or_else(|| TrainError::Resume(format!("{} has no optimizer state", epoch_dir_name(epoch))))?;
    let best = load_checkpoint(dir.join(BEST_DIR)).map_err(resume)?;
    let path = dir.join(HISTORY_FILE);
    let file = fs::File::open(&path).map_err(|e| TrainError::Resume(format!("{}: {e}", path.display())))?;
    let mut records =
        TrainHistory::read_csv(file).map_err(|e| TrainError::Resume(format!("{}: {e}", path.display())))?;
    records.retain(|r| r.epoch <= epoch);
    if records.len() != epoch || records.iter().enumerate().any(|(i, r)| r.epoch != i + 1) {
        return Err(TrainError::Resume(format!(
            "{} does not list epochs 1..={epoch}",
            path.display()
        )));
    }
    Ok(Some(ResumePoint {
        model: last.model,
        optimizer,
        best,
        records,
    }))
}

/// Trains `model` with AdamW on `data.train`, evaluating on `data.validation`
/// after each epoch. Stops after `patience` epochs without strict improvement
/// of the monitored F1 or at `max_epochs`; returns the best epoch's weights.
///
/// Shuffling and dropout draw from streams derived from the seed, epoch and
/// batch index, so a resumed run continues exactly as an uninterrupted one.
pub fn train(
    model: ModelState<f32>,
    data: &TrainData<'_>,
    config: &TrainConfig,
    options: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if data.validation.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let train_labels = data.train.labels.as_ref().ok_or(ModelError::MissingLabels)?;
    if data.validation.labels.is_none() {
        return Err(ModelError::MissingLabels.into());
    }
    if model.config().n_classes != data.labels.len() {
        return Err(TrainError::Config(format!(
            "model has {} classes but the data has {} labels",
            model.config().n_classes,
            data.labels.len()
        )));
    }
    if let Some(&bad) = train_labels.iter().find(|&&l| l >= data.labels.len()) {
        return Err(EvalError::UnknownLabel {
            index: bad,
            n_labels: data.labels.len(),
        }
        .into());
    }

    let snapshot = |model: &ModelState<f32>, optimizer: Option<&OptimizerState<f32>>, epoch, f1| Checkpoint {
        model: model.clone(),
        optimizer: optimizer.cloned(),
        train_config: Some(config.clone()),
        labels: data.labels.to_vec(),
        epoch,
        validation_f1: f1,
        vocab_sha256: options.vocab_sha256.clone(),
    };

    let mut history = TrainHistory::default();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut model = model;
    let mut optimizer = OptimizerState::new(model.params());
    let mut best = snapshot(&model, None, 0, None);
    let mut start = 1;

    if let Some(dir) = &options.run_dir {
        let resumed = if options.resume { find_resume_point(dir)? } else { None };
        match resumed {
            Some(point) => {
                if point.model.config() != model.config() {
                    return Err(TrainError::Resume(
                        "checkpoint model config differs from the requested one".into(),
                    ));
                }
                for r in &point.records {
                    stopper.observe(r.epoch, r.val_f1);
                }
                start = point.records.len() + 1;
                model = point.model;
                optimizer = point.optimizer;
                best = point.best;
                history.records = point.records;
                history.best_epoch = stopper.best_epoch().unwrap_or(0);
                history.stopped_epoch = start - 1;
            }
            None => clear_run_dir(dir).map_err(artifact_err(&history))?,
        }
    }

    let n = data.train.rows();
    for epoch in start..=config.max_epochs {
        if stopper.should_stop() {
            history.early_stopped = true;
            break;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(config.seed, "shuffle", &[epoch as u64]));
        let mut loss_sum = 0.0;
        for (b, rows) in order.chunks(config.batch_size).enumerate() {
            let batch = data.train.select(rows);
            let mut rng = seed::rng(config.seed, "dropout", &[epoch as u64, b as u64]);
            let (loss, grads) = model.loss_and_gradients(&batch, Mode::Train, Some(&mut rng))?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += f64::from(loss) * rows.len() as f64;
            adamw_step(model.params_mut(), &grads, &mut optimizer, config)?;
        }
        let (report, _) = eval::evaluate(&model, data.validation, data.labels, config.eval_batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            val_loss: report.loss.unwrap_or(f64::NAN),
            val_accuracy: report.accuracy,
            val_f1: config.monitor.value(&report),
            val_precision: report.micro.precision,
            val_recall: report.micro.recall,
            val_macro_f1: report.macro_avg.f1,
        };
        let improved = stopper.observe(epoch, record.val_f1);
        history.records.push(record.clone());
        history.stopped_epoch = epoch;
        history.best_epoch = stopper.best_epoch().unwrap_or(epoch);
        if improved {
            best = snapshot(&model, None, epoch, Some(record.val_f1));
        }
        if let Some(dir) = &options.run_dir {
            let current = snapshot(&model, Some(&optimizer), epoch, Some(record.val_f1));
            save_checkpoint(&current, dir.join(epoch_dir_name(epoch))).map_err(artifact_err(&history))?;
            if improved {
                save_checkpoint(&best, dir.join(BEST_DIR)).map_err(artifact_err(&history))?;
            }
            write_history(dir, &history).map_err(artifact_err(&history))?;
        }
        on_epoch(&record);
    }
    if stopper.should_stop() {
        history.early_stopped = true;
    }
    Ok(TrainOutcome { best, history })
}
