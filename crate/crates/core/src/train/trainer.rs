use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::MetricsReport;
use super::optim::{AdamW, AdamWConfig};
use super::schedule::{cosine_lr, EarlyStopping, ScheduleSpec, StopDecision};
use crate::autograd::Tape;
use crate::data::{batches, Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_threshold")]
    pub threshold: f64,
}

fn d_batch() -> usize {
    32
}
fn d_patience() -> usize {
    7
}
fn d_threshold() -> f64 {
    0.5
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            schedule: ScheduleSpec::default(),
            optimizer: AdamWConfig::default(),
            batch_size: d_batch(),
            patience: d_patience(),
            threshold: d_threshold(),
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 || self.patience == 0 {
            return Err(Error::config("batch_size and patience must be positive"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Validation metrics of the restored best weights.
    pub best_val: MetricsReport,
}

/// Forward one batch and return `[B, K]` logits as f64 plus the mean loss.
fn infer_batch<T: Element>(model: &Model, store: &ParamStore<T>, batch: &Batch<T>) -> Result<(Vec<f64>, f64)> {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let x = tape.constant(batch.signals.clone());
    let out = model.forward(&mut tape, &p, x)?;
    let loss = tape.bce_with_logits(out.logits, &batch.labels)?;
    Ok((tape.value(out.logits).to_f64_vec(), tape.value(loss).item().as_f64()))
}

/// Logits for every record in dataset order, and the mean BCE.
pub fn predict<T: Element>(model: &Model, store: &ParamStore<T>, ds: &Dataset, batch_size: usize) -> Result<(Vec<f64>, f64)> {
    if ds.is_empty() {
        return Err(Error::config("cannot evaluate an empty dataset"));
    }
    let mut logits = Vec::with_capacity(ds.len() * ds.classes);
    let mut total = 0.0;
    for batch in batches::<T>(ds, batch_size, None) {
        let (l, loss) = infer_batch(model, store, &batch)?;
        logits.extend(l);
        total += loss * batch.len() as f64;
    }
    Ok((logits, total / ds.len() as f64))
}

pub fn evaluate<T: Element>(model: &Model, store: &ParamStore<T>, ds: &Dataset, threshold: f64, batch_size: usize) -> Result<MetricsReport> {
    let (logits, loss) = predict(model, store, ds, batch_size)?;
    let labels: Vec<u8> = ds.records.iter().flat_map(|r| r.labels.iter().copied()).collect();
    let mut report = MetricsReport::from_logits(&logits, &labels, ds.classes, threshold)?;
    report.loss = Some(loss);
    Ok(report)
}

/// One optimisation step on a batch; returns the batch loss.
pub fn train_step<T: Element>(model: &Model, store: &mut ParamStore<T>, opt: &mut AdamW<T>, batch: &Batch<T>, lr: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(batch.signals.clone());
    let out = model.forward(&mut tape, &p, x)?;
    let loss = tape.bce_with_logits(out.logits, &batch.labels)?;
    let value = tape.value(loss).item().as_f64();
    let grads = tape.backward(loss)?;
    opt.step_from_tape(store, &p, &grads, lr)?;
    Ok(value)
}

/// Full recipe: per epoch shuffle, AdamW with cosine lr, validation loss
/// for early stopping. The best-validation weights are restored into
/// `store` before returning.
pub fn train<T: Element>(
    model: &Model,
    store: &mut ParamStore<T>,
    train_set: &Dataset,
    val_set: &Dataset,
    spec: &TrainSpec,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    spec.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::config("training and validation sets must be non-empty"));
    }
    let mut opt = AdamW::new(spec.optimizer, store);
    let mut stopper = EarlyStopping::new(spec.patience);
    let mut best = store.clone();
    let mut best_val = None;
    let mut log = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..spec.schedule.total_epochs {
        let lr = cosine_lr(epoch, &spec.schedule);
        let mut total = 0.0;
        let shuffle = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64);
        for batch in batches::<T>(train_set, spec.batch_size, Some(shuffle)) {
            total += train_step(model, store, &mut opt, &batch, lr)? * batch.len() as f64;
        }
        let val = evaluate(model, store, val_set, spec.threshold, spec.batch_size)?;
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: total / train_set.len() as f64,
            val_loss: val.loss.unwrap_or(f64::NAN),
            macro_f1: val.macro_avg.f1,
        };
        on_epoch(&entry);
        log.push(entry);
        match stopper.update(epoch, entry.val_loss) {
            StopDecision::Improved => {
                best = store.clone();
                best_val = Some(val);
            }
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    *store = best;
    let best_epoch = stopper.best_epoch.unwrap_or(0);
    let best_val = match best_val {
        Some(v) => v,
        None => evaluate(model, store, val_set, spec.threshold, spec.batch_size)?,
    };
    Ok(TrainOutcome {
        log,
        best_epoch,
        stopped_early,
        best_val,
    })
}

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
