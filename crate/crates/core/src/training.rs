//! Seeded minibatch training with Adam, JSON-lines logging and resumable
//! checkpoints.
//!
//! Every source of randomness is a separate ChaCha8 stream of the run seed:
//! parameter initialization, minibatch shuffling, the train/test split, and
//! the per-step noise (prior samples and encoder noise). Checkpoints carry the
//! exact position of the shuffling and noise streams, so an interrupted run
//! resumed from a checkpoint reproduces the uninterrupted run step for step.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{load_dataset, split_indices, DatasetError, LabeledImageDataset, MinibatchIter};
use crate::diffcore::{adam_step, DiffError, Tape};
use crate::divergences::sample_prior;
use crate::models::{
    load_checkpoint, objective, save_checkpoint, Breakdown, Checkpoint, ModelError, ModelSpec, ObjectiveKind,
    WaeModel,
};
use crate::rng::{stream, RngState};

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_SPLIT: u64 = 3;

pub const LOG_FILE: &str = "train.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite objective at step {step}: {breakdown:?}")]
    NonFinite { step: u64, breakdown: Breakdown },
    #[error("checkpoint does not match the requested run: {0}")]
    SpecMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn default_batch_size() -> usize {
    100
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_log_interval() -> u64 {
    10
}
fn default_test_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub model: ModelSpec,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Steps between log records.
    #[serde(default = "default_log_interval")]
    pub log_interval: u64,
    /// Steps between numbered checkpoints; 0 keeps only the last one.
    #[serde(default)]
    pub checkpoint_interval: u64,
    /// Run directory; `None` trains in memory only.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Fraction of the dataset held out from training.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Stop early after this many total steps.
    #[serde(default)]
    pub max_steps: Option<u64>,
}

impl TrainConfig {
    pub fn new(dataset: impl Into<PathBuf>, model: ModelSpec, epochs: usize, seed: u64) -> Self {
        Self {
            dataset: dataset.into(),
            model,
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            epochs,
            seed,
            log_interval: default_log_interval(),
            checkpoint_interval: 0,
            out_dir: None,
            test_fraction: default_test_fraction(),
            max_steps: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        if self.batch_size < 2 {
            return Err(TrainError::Config(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.log_interval == 0 {
            return Err(TrainError::Config("log interval must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(TrainError::Config(format!("test fraction must lie in [0, 1), got {}", self.test_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub epoch: u64,
    pub objective: f64,
    pub recon: f64,
    pub divergence: f64,
    pub divergence_raw: f64,
    pub penalty: f64,
    pub learning_rate: f64,
    pub wall_clock_s: f64,
}

impl TrainRecord {
    /// Equality of everything except wall-clock time.
    pub fn same_trajectory(&self, other: &TrainRecord) -> bool {
        TrainRecord {
            wall_clock_s: 0.0,
            ..self.clone()
        } == TrainRecord {
            wall_clock_s: 0.0,
            ..other.clone()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    /// Non-record lines: run start, resume notes.
    pub events: Vec<serde_json::Value>,
}

impl TrainLog {
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| a.same_trajectory(b))
    }

    /// Reads a log file written by [`Trainer`].
    pub fn read(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path)?;
        let mut log = TrainLog::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line)?;
            if v.get("event").is_some() {
                log.events.push(v);
            } else {
                log.records.push(serde_json::from_value(v)?);
            }
        }
        Ok(log)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ShuffleState {
    order: Vec<usize>,
    pos: usize,
    rng: RngState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunState {
    config: TrainConfig,
    shuffle: ShuffleState,
    noise: RngState,
}

/// Indices of the training and held-out parts of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn new(n: usize, test_fraction: f64, seed: u64) -> Self {
        let (train, test) = split_indices(n, test_fraction, &mut stream(seed, STREAM_SPLIT));
        Self { train, test }
    }
}

pub struct Trainer<'a> {
    config: TrainConfig,
    data: &'a LabeledImageDataset,
    model: WaeModel,
    split: Split,
    batches: MinibatchIter<ChaCha8Rng>,
    noise: ChaCha8Rng,
    step: u64,
    log: TrainLog,
    writer: Option<BufWriter<File>>,
    started: Instant,
}

impl<'a> Trainer<'a> {
    /// Fresh run: parameters initialized from the run seed.
    pub fn new(config: TrainConfig, data: &'a LabeledImageDataset) -> Result<Self, TrainError> {
        config.validate()?;
        check_data(&config.model, data)?;
        let init_seed = stream(config.seed, STREAM_INIT).random();
        let model = WaeModel::new(config.model.clone(), init_seed)?;
        let mut trainer = Self::assemble(config, data, model, 0)?;
        trainer.open_log(false)?;
        trainer.event(serde_json::json!({"event": "start", "config": trainer.config}))?;
        Ok(trainer)
    }

    /// Continues the run stored in `checkpoint` under `config`. The model spec,
    /// seed, batch size and test fraction must equal the checkpointed run's;
    /// other fields (learning rate, epochs, intervals, output directory) may change.
    pub fn resume(
        config: TrainConfig,
        data: &'a LabeledImageDataset,
        checkpoint: Checkpoint,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let state: RunState = serde_json::from_value(checkpoint.state)
            .map_err(|e| TrainError::SpecMismatch(format!("checkpoint has no training state: {e}")))?;
        let old = &state.config;
        if old.model != config.model {
            return Err(TrainError::SpecMismatch(format!(
                "model spec differs from the checkpoint's ({:?} vs {:?})",
                config.model, old.model
            )));
        }
        for (name, same) in [
            ("seed", old.seed == config.seed),
            ("batch size", old.batch_size == config.batch_size),
            ("test fraction", old.test_fraction == config.test_fraction),
        ] {
            if !same {
                return Err(TrainError::SpecMismatch(format!("{name} differs from the checkpoint's")));
            }
        }
        check_data(&config.model, data)?;
        let mut trainer = Self::assemble(config, data, checkpoint.model, checkpoint.step)?;
        let shuffle_rng = state.shuffle.rng.restore().map_err(TrainError::SpecMismatch)?;
        trainer.batches.restore(state.shuffle.order, state.shuffle.pos, shuffle_rng)?;
        trainer.noise = state.noise.restore().map_err(TrainError::SpecMismatch)?;
        trainer.open_log(true)?;
        let mut note = serde_json::json!({"event": "resume", "step": trainer.step});
        if old.learning_rate != trainer.config.learning_rate {
            note["learning_rate_changed"] =
                serde_json::json!({"from": old.learning_rate, "to": trainer.config.learning_rate});
        }
        trainer.event(note)?;
        Ok(trainer)
    }

    fn assemble(
        config: TrainConfig,
        data: &'a LabeledImageDataset,
        model: WaeModel,
        step: u64,
    ) -> Result<Self, TrainError> {
        let split = Split::new(data.len(), config.test_fraction, config.seed);
        let batches = MinibatchIter::new(split.train.clone(), config.batch_size, stream(config.seed, STREAM_SHUFFLE))?;
        Ok(Self {
            noise: stream(config.seed, STREAM_NOISE),
            config,
            data,
            model,
            split,
            batches,
            step,
            log: TrainLog::default(),
            writer: None,
            started: Instant::now(),
        })
    }

    fn open_log(&mut self, append: bool) -> Result<(), TrainError> {
        let Some(dir) = &self.config.out_dir else {
            return Ok(());
        };
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), serde_json::to_vec_pretty(&self.config)?)?;
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(dir.join(LOG_FILE))?;
        self.writer = Some(BufWriter::new(file));
        Ok(())
    }

    fn event(&mut self, v: serde_json::Value) -> Result<(), TrainError> {
        if let Some(w) = &mut self.writer {
            serde_json::to_writer(&mut *w, &v)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.log.events.push(v);
        Ok(())
    }

    pub fn model(&self) -> &WaeModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut WaeModel {
        &mut self.model
    }

    pub fn into_model(self) -> WaeModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.batches.batches_per_epoch() as u64
    }

    /// Step at which [`Trainer::run`] stops.
    pub fn target_steps(&self) -> u64 {
        let full = self.config.epochs as u64 * self.steps_per_epoch();
        self.config.max_steps.map_or(full, |m| m.min(full))
    }

    /// One Adam update on the next minibatch; returns the pre-update breakdown.
    pub fn step(&mut self) -> Result<Breakdown, TrainError> {
        let idx = self.batches.next().expect("minibatch stream is endless");
        let x = self.data.batch(&idx);
        let prior = match self.model.spec.objective {
            ObjectiveKind::Wae => sample_prior(&self.model.spec.prior_spec(), idx.len(), &mut self.noise),
            ObjectiveKind::BetaVae => crate::diffcore::Tensor::zeros(&[1, 1]),
        };
        let mut tape = Tape::new();
        let obj = objective(&self.model, &mut tape, &x, &prior, &mut self.noise)?;
        if !obj.breakdown.is_finite() {
            return Err(TrainError::NonFinite {
                step: self.step,
                breakdown: obj.breakdown,
            });
        }
        tape.backward(obj.loss, &mut self.model.params)?;
        adam_step(&mut self.model.params, self.config.learning_rate)?;
        self.step += 1;
        Ok(obj.breakdown)
    }

    fn record(&mut self, b: Breakdown) -> Result<(), TrainError> {
        let rec = TrainRecord {
            step: self.step,
            epoch: (self.step - 1) / self.steps_per_epoch(),
            objective: b.total,
            recon: b.recon,
            divergence: b.divergence,
            divergence_raw: b.divergence_raw,
            penalty: b.penalty,
            learning_rate: self.config.learning_rate,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
        };
        if let Some(w) = &mut self.writer {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.log.records.push(rec);
        Ok(())
    }

    /// Trains until [`Trainer::target_steps`], logging every `log_interval`
    /// steps and at the final step, and writes checkpoints into the run directory.
    pub fn run(&mut self) -> Result<(), TrainError> {
        let target = self.target_steps();
        while self.step < target {
            let b = self.step()?;
            if self.step.is_multiple_of(self.config.log_interval) || self.step == target {
                self.record(b)?;
            }
            let interval = self.config.checkpoint_interval;
            if interval > 0 && self.step.is_multiple_of(interval) {
                if let Some(dir) = self.config.out_dir.clone() {
                    self.save(dir.join(format!("step-{:08}.ckpt", self.step)))?;
                }
            }
        }
        if let Some(dir) = self.config.out_dir.clone() {
            self.save(dir.join(LAST_CHECKPOINT))?;
        }
        Ok(())
    }

    /// Writes a resumable checkpoint of the current state.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let (order, pos, rng) = self.batches.state();
        let state = RunState {
            config: self.config.clone(),
            shuffle: ShuffleState {
                order: order.to_vec(),
                pos,
                rng: RngState::capture(rng),
            },
            noise: RngState::capture(&self.noise),
        };
        save_checkpoint(path, &self.model, self.step, &serde_json::to_value(state)?)?;
        Ok(())
    }
}

fn check_data(spec: &ModelSpec, data: &LabeledImageDataset) -> Result<(), TrainError> {
    if data.image_size() != spec.input_dim() {
        return Err(TrainError::Config(format!(
            "dataset images have {} pixels but the model expects {}",
            data.image_size(),
            spec.input_dim()
        )));
    }
    Ok(())
}

/// Result of a complete run.
pub struct TrainOutcome {
    pub model: WaeModel,
    pub log: TrainLog,
    pub split: Split,
    pub steps: u64,
}

/// Trains on an in-memory dataset.
pub fn train_on(config: TrainConfig, data: &LabeledImageDataset) -> Result<TrainOutcome, TrainError> {
    let mut t = Trainer::new(config, data)?;
    t.run()?;
    Ok(finish(t))
}

/// Loads `config.dataset` and trains on it.
pub fn train(config: TrainConfig) -> Result<TrainOutcome, TrainError> {
    let data = load_dataset(&config.dataset)?;
    train_on(config, &data)
}

/// Resumes from a checkpoint file with `config` as the (possibly overridden)
/// run configuration.
pub fn resume_on(
    checkpoint: impl AsRef<Path>,
    config: TrainConfig,
    data: &LabeledImageDataset,
) -> Result<TrainOutcome, TrainError> {
    let ck = load_checkpoint(checkpoint)?;
    let mut t = Trainer::resume(config, data, ck)?;
    t.run()?;
    Ok(finish(t))
}

/// The configuration a checkpoint was written under.
pub fn checkpoint_config(checkpoint: &Checkpoint) -> Result<TrainConfig, TrainError> {
    let state: RunState = serde_json::from_value(checkpoint.state.clone())
        .map_err(|e| TrainError::SpecMismatch(format!("checkpoint has no training state: {e}")))?;
    Ok(state.config)
}

fn finish(t: Trainer<'_>) -> TrainOutcome {
    let steps = t.step;
    let split = t.split.clone();
    let log = t.log.clone();
    TrainOutcome {
        model: t.into_model(),
        log,
        split,
        steps,
    }
}
