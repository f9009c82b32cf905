//! Head training with early stopping and best-epoch restore, checkpointing,
//! and the hyperparameter grid.
//!
//! Training runs on precomputed head inputs ([`FeatureSet`]): the branches are
//! frozen, so their outputs are computed once per tile and reused by every
//! epoch, run and grid configuration.

mod checkpoint;
mod grid;

pub use checkpoint::{read_checkpoint, resume, write_checkpoint};
pub use grid::{
    run_grid, run_grid_with, select_best, summarize, ConfigSummary, GridSpec, GridSummary,
};

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::{confusion, f1_scores, RunMetrics};
use crate::model::{Model, ModelConfig, HEAD_PREFIX};
use crate::nn::{
    cross_entropy, init_weights, sgd_step, Mode, ModelWeights, Sequential, SgdState, Tensor,
};
use crate::seed;
#[cfg(test)]
use std::collections::BTreeMap;

const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 32,
            patience: 30,
            max_epochs: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f32| v.is_finite() && v > 0.0;
        if !positive(self.learning_rate) {
            return Err(Error::usage("lr", "learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::usage("momentum", "momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::usage("batch-size", "batch size must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::usage("patience", "patience must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::usage("max-epochs", "at least one epoch is required"));
        }
        Ok(())
    }
}

/// Head inputs (`[n, width]`) with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl FeatureSet {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.rank() != 2 {
            return Err(Error::Shape(format!(
                "feature matrix must be rank 2, got {:?}",
                inputs.shape()
            )));
        }
        if inputs.shape()[0] != labels.len() {
            return Err(Error::LengthMismatch {
                left: inputs.shape()[0],
                right: labels.len(),
            });
        }
        Ok(FeatureSet { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Rows `idx` gathered into a new matrix.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let w = self.width();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(&self.inputs.data()[i * w..(i + 1) * w]);
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::from_vec(&[idx.len(), w], data).expect("gathered shape"),
            labels,
        )
    }

    fn chunks(&self) -> impl Iterator<Item = (Tensor, Vec<usize>)> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(EVAL_CHUNK)
            .map(|c| self.gather(c))
            .collect::<Vec<_>>()
            .into_iter()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitFeatures {
    pub train: FeatureSet,
    pub val: FeatureSet,
    pub test: FeatureSet,
}

impl SplitFeatures {
    pub fn check_nonempty(&self) -> Result<()> {
        for (name, set) in [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ] {
            if set.is_empty() {
                return Err(Error::InsufficientData(format!(
                    "{name} partition is empty"
                )));
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy over `set` with dropout off, accumulated in f64.
pub fn mean_loss(head: &Sequential, weights: &ModelWeights, set: &FeatureSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::InsufficientData("loss over an empty set".into()));
    }
    let mut total = 0.0f64;
    for (x, labels) in set.chunks() {
        let probs = head.infer(weights, x)?;
        for (row, &l) in probs.rows().zip(&labels) {
            total -= (row[l].max(f32::MIN_POSITIVE) as f64).ln();
        }
    }
    Ok(total / set.len() as f64)
}

/// Argmax class per row; ties go to the lower class index.
pub fn predict_labels(
    head: &Sequential,
    weights: &ModelWeights,
    set: &FeatureSet,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(set.len());
    for (x, _) in set.chunks() {
        let probs = head.infer(weights, x)?;
        out.extend(probs.rows().map(argmax));
    }
    Ok(out)
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate_features(
    head: &Sequential,
    weights: &ModelWeights,
    set: &FeatureSet,
) -> Result<RunMetrics> {
    let predicted = predict_labels(head, weights, set)?;
    Ok(f1_scores(&confusion(&set.labels, &predicted)?))
}

/// Source of the per-epoch validation loss. The feature-set implementation is
/// the real one; tests inject scripted streams.
pub trait Validator {
    fn val_loss(&mut self, head: &Sequential, weights: &ModelWeights, epoch: usize) -> Result<f64>;
}

impl Validator for &FeatureSet {
    fn val_loss(
        &mut self,
        head: &Sequential,
        weights: &ModelWeights,
        _epoch: usize,
    ) -> Result<f64> {
        mean_loss(head, weights, self)
    }
}

/// Replays a fixed loss per epoch; the last value repeats once exhausted.
#[derive(Clone, Debug)]
pub struct ScriptedLosses(pub Vec<f64>);

impl Validator for ScriptedLosses {
    fn val_loss(&mut self, _: &Sequential, _: &ModelWeights, epoch: usize) -> Result<f64> {
        self.0
            .get(epoch - 1)
            .or(self.0.last())
            .copied()
            .ok_or_else(|| Error::State("empty scripted loss stream".into()))
    }
}

/// Patience counter over best-so-far validation loss. Only a strict decrease
/// counts as improvement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best_val_loss: f64,
    /// 1-based; 0 before the first observation.
    pub best_epoch: usize,
    pub patience_counter: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            patience_counter: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> Verdict {
        if val_loss < self.best_val_loss {
            self.best_val_loss = val_loss;
            self.best_epoch = epoch;
            self.patience_counter = 0;
            Verdict::Improved
        } else {
            self.patience_counter += 1;
            if self.patience_counter >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Continue
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

/// Everything needed to continue a run. Shuffle orders and dropout masks are
/// derived from `(run_seed, epoch, batch)`, so no generator state is carried.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub run_seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub stopper: EarlyStopper,
    pub finished: bool,
    pub history: Vec<EpochLog>,
    pub weights: ModelWeights,
    /// Snapshot taken at `stopper.best_epoch`.
    pub best_weights: ModelWeights,
    pub optimizer: SgdState,
}

impl TrainState {
    /// Fresh state with the head re-initialized from the run seed.
    pub fn new(head: &Sequential, config: TrainConfig, run_seed: u64) -> Result<Self> {
        config.validate()?;
        let weights: ModelWeights =
            init_weights(head, seed::derive(run_seed, &[seed::tag("head")]), false)?;
        Ok(TrainState {
            config,
            run_seed,
            epoch: 0,
            stopper: EarlyStopper::new(config.patience),
            finished: false,
            history: Vec::new(),
            best_weights: weights.clone(),
            weights,
            optimizer: SgdState::default(),
        })
    }

    /// One epoch of minibatch SGD followed by validation and the stopping
    /// decision.
    pub fn step(
        &mut self,
        head: &Sequential,
        train: &FeatureSet,
        validator: &mut impl Validator,
    ) -> Result<&EpochLog> {
        if self.finished {
            return Err(Error::State("training already finished".into()));
        }
        if train.is_empty() {
            return Err(Error::InsufficientData("train partition is empty".into()));
        }
        let started = Instant::now();
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seed::rng(
            self.run_seed,
            &[seed::tag("shuffle"), epoch as u64],
        ));
        let lr = self.config.learning_rate;
        let momentum = self.config.momentum;
        let mut loss_sum = 0.0f64;
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            let (x, labels) = train.gather(batch);
            let mask_seed = seed::derive(
                self.run_seed,
                &[seed::tag("dropout"), epoch as u64, b as u64],
            );
            let acts = head.forward(&self.weights, x, Mode::Train, mask_seed)?;
            loss_sum += cross_entropy(acts.output(), &labels)? as f64 * batch.len() as f64;
            let grads = head.backward(&self.weights, &acts, &labels)?;
            sgd_step(&mut self.weights, &grads, lr, momentum, &mut self.optimizer)?;
        }
        let val_loss = validator.val_loss(head, &self.weights, epoch)?;
        let verdict = self.stopper.observe(epoch, val_loss);
        if verdict == Verdict::Improved {
            self.best_weights = self.weights.clone();
        }
        self.epoch = epoch;
        self.finished = verdict == Verdict::Stop || epoch >= self.config.max_epochs;
        self.history.push(EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        });
        Ok(self.history.last().unwrap())
    }

    /// Steps until finished or `until_epoch` is reached, writing a checkpoint
    /// after every epoch when a path is given.
    pub fn run(
        &mut self,
        head: &Sequential,
        train: &FeatureSet,
        validator: &mut impl Validator,
        checkpoint: Option<&Path>,
        until_epoch: Option<usize>,
    ) -> Result<()> {
        while !self.finished && until_epoch.is_none_or(|k| self.epoch < k) {
            self.step(head, train, validator)?;
            if let Some(path) = checkpoint {
                write_checkpoint(self, path)?;
            }
        }
        Ok(())
    }

    pub fn stop_epoch(&self) -> usize {
        self.epoch
    }
}

/// `epoch,train_loss,val_loss,seconds` rows.
pub fn run_log_csv(history: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,seconds\n");
    for e in history {
        writeln!(
            out,
            "{},{:.8},{:.8},{:.3}",
            e.epoch, e.train_loss, e.val_loss, e.seconds
        )
        .unwrap();
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub config: ModelConfig,
    pub run_index: usize,
    pub run_seed: u64,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_epoch: usize,
    pub val_metrics: RunMetrics,
    pub test_metrics: RunMetrics,
    pub seconds: f64,
}

impl RunRecord {
    /// The record with wall-clock fields zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> RunRecord {
        let mut r = self.clone();
        r.seconds = 0.0;
        for e in &mut r.history {
            e.seconds = 0.0;
        }
        r
    }
}

/// Restores the best-epoch head into `model`, then computes validation
/// metrics and, exactly once, test metrics.
pub fn finish_run(
    model: &mut Model,
    state: &TrainState,
    data: &SplitFeatures,
    run_index: usize,
) -> Result<RunRecord> {
    if !state.finished {
        return Err(Error::State(format!(
            "run stopped at epoch {} before finishing",
            state.epoch
        )));
    }
    model.weights.assign(&state.best_weights)?;
    let head_weights = model.weights.subset(HEAD_PREFIX);
    let val_metrics = evaluate_features(&model.head, &head_weights, &data.val)?;
    let test_metrics = evaluate_features(&model.head, &head_weights, &data.test)?;
    Ok(RunRecord {
        config: model.config,
        run_index,
        run_seed: state.run_seed,
        history: state.history.clone(),
        best_epoch: state.stopper.best_epoch,
        best_val_loss: state.stopper.best_val_loss,
        stop_epoch: state.stop_epoch(),
        val_metrics,
        test_metrics,
        seconds: state.history.iter().map(|e| e.seconds).sum(),
    })
}

/// Trains the head of `model` from scratch for one run and restores the
/// best epoch.
pub fn train_run(
    model: &mut Model,
    data: &SplitFeatures,
    config: TrainConfig,
    run_index: usize,
    run_seed: u64,
) -> Result<RunRecord> {
    data.check_nonempty()?;
    let width = model.config.head_input_width();
    for set in [&data.train, &data.val, &data.test] {
        if set.width() != width {
            return Err(Error::Shape(format!(
                "{} expects {width} features, got {}",
                model.config.key(),
                set.width()
            )));
        }
    }
    let mut state = TrainState::new(&model.head, config, run_seed)?;
    state.run(&model.head, &data.train, &mut &data.val, None, None)?;
    finish_run(model, &state, data, run_index)
}

#[cfg(test)]
mod tests;
