//! Loss, optimiser, learning-rate schedule, early stopping, metrics and the
//! epoch loop.

mod metrics;
mod optim;
mod schedule;
mod trainer;

pub use metrics::{sigmoid, ClassMetrics, MacroMetrics, MetricsReport};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::{cosine_lr, stop_epoch, EarlyStopping, ScheduleSpec, StopDecision};
pub use trainer::{evaluate, predict, train, train_step, write_log_csv, EpochLog, TrainOutcome, TrainSpec};
