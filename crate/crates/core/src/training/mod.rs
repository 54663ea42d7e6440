//! Optimization: pool-sorted batches, per-example gradients reduced in a
//! fixed order, clipping, Adam, per-epoch dev evaluation and early stopping.

mod checkpoint;
mod optim;

pub use checkpoint::{CheckpointRecord, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{adam_step, clip, clip_elementwise, clip_global_norm, ClipMode, OptimizerState};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{make_epoch_batches, Batch, Example};
use crate::error::{NseError, Result};
use crate::hypothesis::HaltingMode;
use crate::layers::DropoutSpec;
use crate::model::{ModelConfig, NseModel, ReaderInput};
use crate::numerics::{derive_seed, seeded_rng, Gradients};
use crate::parallel::par_map;
use crate::prediction::select_answer;

fn default_parallel() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub k: usize,
    pub embed_dim: usize,
    pub mode: HaltingMode,
    pub lr: f64,
    pub batch_size: usize,
    /// Examples drawn per sorting pool; `None` means `32 * batch_size`.
    pub pool_size: Option<usize>,
    pub clip: f64,
    pub clip_mode: ClipMode,
    pub dropout: f64,
    /// Consecutive epochs without a dev improvement before stopping;
    /// 0 disables early stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub crossed_state_init: bool,
    /// Fan per-example passes out over threads. Results do not depend on it,
    /// so it is not stored in checkpoints.
    #[serde(skip_serializing, default = "default_parallel")]
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 436,
            embed_dim: 300,
            mode: HaltingMode::AdaptiveComputation { steps: 12 },
            lr: 0.001,
            batch_size: 32,
            pool_size: None,
            clip: 15.0,
            clip_mode: ClipMode::GlobalNorm,
            dropout: 0.2,
            patience: 1,
            max_epochs: 50,
            seed: 0,
            crossed_state_init: false,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(NseError::invalid(m.to_string()));
        if self.k == 0 || self.k % 2 != 0 {
            return fail("k must be positive and even");
        }
        if self.embed_dim == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return fail("embedding size, batch size and max epochs must be positive");
        }
        if self.mode.steps() == 0 {
            return fail("the loop needs at least one step");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.clip > 0.0) {
            return fail("learning rate and clip threshold must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout rate must lie in [0, 1)");
        }
        if self.pool_size.is_some_and(|p| p < self.batch_size) {
            return fail("pool size must be at least the batch size");
        }
        Ok(())
    }

    pub fn pool_size(&self) -> usize {
        self.pool_size.unwrap_or(32 * self.batch_size)
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            k: self.k,
            crossed_state_init: self.crossed_state_init,
        }
    }
}

/// Stops once `patience` consecutive epochs fail to beat the best dev
/// accuracy so far.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: None, best_epoch: 0, bad_epochs: 0 }
    }

    pub fn observe(&mut self, epoch: usize, accuracy: f64) -> StopDecision {
        let improved = self.best.is_none_or(|b| accuracy > b);
        if improved {
            self.best = Some(accuracy);
            self.best_epoch = epoch;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        StopDecision {
            improved,
            stop: self.patience > 0 && self.bad_epochs >= self.patience,
        }
    }
}

/// Mean loss and mean gradient over a batch. Each example draws its dropout
/// masks from a stream keyed by `(seed, epoch, step, example)`, and the
/// per-example gradients are summed in batch order, so the result is the
/// same whether or not the passes ran on several threads.
pub fn batch_gradients(
    model: &NseModel,
    rows: &[ReaderInput],
    mode: HaltingMode,
    dropout: f64,
    stream: &[u64],
    parallel: bool,
) -> Result<(f64, Gradients)> {
    if rows.is_empty() {
        return Err(NseError::invalid("empty batch"));
    }
    let drop = if dropout > 0.0 { DropoutSpec::train(dropout) } else { DropoutSpec::eval() };
    let results = par_map(rows, parallel, |i, row| {
        let mut parts = stream.to_vec();
        parts.push(i as u64);
        let mut rng = seeded_rng(derive_seed(0x5eed, &parts));
        model.example_gradients(row, mode, drop, &mut rng)
    });
    let mut total = Gradients::for_store(&model.store);
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l;
        total.add_scaled(&g, 1.0);
    }
    let scale = 1.0 / rows.len() as f64;
    total.scale(scale);
    Ok((loss * scale, total))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub source: String,
    pub predicted: usize,
    pub gold: usize,
    pub correct: bool,
    pub loss: f64,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub records: Vec<ExampleRecord>,
}

/// Accuracy with dropout off. Examples are read unpadded, one at a time.
pub fn evaluate(model: &NseModel, examples: &[Example], mode: HaltingMode, parallel: bool) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(NseError::invalid("cannot evaluate an empty split"));
    }
    let records = par_map(examples, parallel, |_, e| -> Result<ExampleRecord> {
        let input = e.to_input()?;
        let pred = model.predict(&input, mode)?;
        let predicted = select_answer(&pred.distribution.probs)?;
        Ok(ExampleRecord {
            source: e.source.clone(),
            predicted,
            gold: input.gold,
            correct: predicted == input.gold,
            loss: pred.loss,
            probs: pred.distribution.probs,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = records.len() as f64;
    Ok(EvalReport {
        accuracy: records.iter().filter(|r| r.correct).count() as f64 / n,
        mean_loss: records.iter().map(|r| r.loss).sum::<f64>() / n,
        records,
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step { epoch: usize, step: u64, loss: f64, grad_norm: f64 },
    Epoch { epoch: usize, train_loss: f64, dev_accuracy: f64, dev_loss: f64, best: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

/// Model plus optimizer state, advanced one batch at a time.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: NseModel,
    pub optimizer: OptimizerState,
}

impl Trainer {
    pub fn new(config: TrainConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let model = NseModel::new(config.model_config(vocab_size), derive_seed(config.seed, &[0]))?;
        let optimizer = OptimizerState::new(&model.store);
        Ok(Trainer { config, model, optimizer })
    }

    /// Forward/backward over `batch`, clip, and one Adam update.
    pub fn step(&mut self, batch: &Batch, epoch: usize, index: usize) -> Result<StepStats> {
        let c = &self.config;
        let stream = [c.seed, epoch as u64, index as u64];
        let (loss, mut grads) = batch_gradients(&self.model, &batch.rows, c.mode, c.dropout, &stream, c.parallel)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(NseError::NonFiniteLoss { epoch, batch: index });
        }
        let grad_norm = clip(&mut grads, c.clip_mode, c.clip)?;
        adam_step(&mut self.model.store, &grads, &mut self.optimizer, c.lr)?;
        Ok(StepStats { loss, grad_norm })
    }

    pub fn evaluate(&self, examples: &[Example]) -> Result<EvalReport> {
        evaluate(&self.model, examples, self.config.mode, self.config.parallel)
    }

    pub fn checkpoint(&self, epoch: usize, dev_accuracy: f64) -> CheckpointRecord {
        CheckpointRecord {
            model: self.model.config.clone(),
            train: self.config.clone(),
            vocab: String::new(),
            epoch: epoch as u64,
            dev_accuracy,
            params: self.model.store.clone(),
            optimizer: self.optimizer.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: CheckpointRecord,
    pub history: Vec<EpochSummary>,
    pub steps: u64,
}

fn write_log(log: &mut Option<&mut dyn Write>, record: &LogRecord) -> Result<()> {
    if let Some(w) = log {
        let line = serde_json::to_string(record).expect("log records serialize");
        writeln!(w, "{line}").map_err(|e| NseError::io("training log", e))?;
    }
    Ok(())
}

/// Trains until early stopping or `max_epochs`, returning the checkpoint of
/// the epoch with the best dev accuracy.
pub fn train(
    config: &TrainConfig,
    vocab_size: usize,
    train_set: &[Example],
    dev_set: &[Example],
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(NseError::invalid("training and dev splits must be non-empty"));
    }
    if train_set.len() < config.batch_size {
        return Err(NseError::invalid(format!(
            "{} training examples cannot fill a batch of {}",
            train_set.len(),
            config.batch_size
        )));
    }
    let mut trainer = Trainer::new(config.clone(), vocab_size)?;
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best: Option<CheckpointRecord> = None;
    let mut history = Vec::new();
    for epoch in 1..=config.max_epochs {
        let batches = make_epoch_batches(train_set, config.batch_size, config.pool_size(), config.seed, epoch as u64)?;
        let mut total = 0.0;
        for (i, batch) in batches.iter().enumerate() {
            let stats = trainer.step(batch, epoch, i)?;
            total += stats.loss;
            write_log(
                &mut log,
                &LogRecord::Step { epoch, step: trainer.optimizer.step, loss: stats.loss, grad_norm: stats.grad_norm },
            )?;
        }
        let train_loss = total / batches.len() as f64;
        let dev = trainer.evaluate(dev_set)?;
        let decision = stopper.observe(epoch, dev.accuracy);
        log::info!("epoch {epoch}: train loss {train_loss:.4}, dev accuracy {:.4}", dev.accuracy);
        write_log(
            &mut log,
            &LogRecord::Epoch {
                epoch,
                train_loss,
                dev_accuracy: dev.accuracy,
                dev_loss: dev.mean_loss,
                best: decision.improved,
            },
        )?;
        history.push(EpochSummary { epoch, train_loss, dev_accuracy: dev.accuracy });
        if decision.improved {
            best = Some(trainer.checkpoint(epoch, dev.accuracy));
        }
        if decision.stop {
            break;
        }
    }
    Ok(TrainOutcome {
        best: best.expect("the first epoch always improves"),
        history,
        steps: trainer.optimizer.step,
    })
}
