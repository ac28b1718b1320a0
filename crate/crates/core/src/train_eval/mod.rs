//! Training and evaluation: cross-entropy loss, Adam, the plateau learning
//! rate schedule, the training loop itself, classification metrics and the
//! attention-based cause report.

mod adam;
mod explain;
mod loss;
mod metrics;
mod schedule;
mod train;

pub use adam::{adam_step, AdamState};
pub use explain::{explain, CauseReport, ClassProfile};
pub use loss::cross_entropy;
pub use metrics::{evaluate, metrics_from_confusion, ClassMetrics, MetricsReport};
pub use schedule::LrSchedule;
pub use train::{train, EpochRecord, TrainOptions, TrainOutcome};
