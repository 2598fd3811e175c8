use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(default = "d_start")]
    pub lr_start: f64,
    #[serde(default = "d_end")]
    pub lr_end: f64,
    #[serde(default = "d_epochs")]
    pub total_epochs: usize,
}

fn d_start() -> f64 {
    1e-4
}
fn d_end() -> f64 {
    1e-5
}
fn d_epochs() -> usize {
    50
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            lr_start: d_start(),
            lr_end: d_end(),
            total_epochs: d_epochs(),
        }
    }
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return Err(Error::config(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.total_epochs == 0 {
            return Err(Error::config("total_epochs must be positive"));
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_start` at epoch 0 to `lr_end` at epoch `T − 1`.
pub fn cosine_lr(epoch: usize, spec: &ScheduleSpec) -> f64 {
    if spec.total_epochs <= 1 {
        return spec.lr_start;
    }
    let last = (spec.total_epochs - 1) as f64;
    let e = (epoch as f64).min(last);
    // Pin both endpoints; the affine map can be off by an ulp.
    if epoch == 0 {
        return spec.lr_start;
    }
    if e == last {
        return spec.lr_end;
    }
    spec.lr_end + 0.5 * (spec.lr_start - spec.lr_end) * (1.0 + (std::f64::consts::PI * e / last).cos())
}

/// Patience-based stopping on a loss that should decrease.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    /// Consecutive epochs without a strict improvement.
    pub stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

/// Index of the epoch at which a run over `history` stops, if it does.
pub fn stop_epoch(history: &[f64], patience: usize) -> Option<usize> {
    let mut es = EarlyStopping::new(patience);
    history
        .iter()
        .enumerate()
        .find(|&(e, &l)| es.update(e, l) == StopDecision::Stop)
        .map(|(e, _)| e)
}
