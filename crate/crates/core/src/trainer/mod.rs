//! Evolving-loss training, multitask loss, Adam, metrics and Pareto selection.

pub mod loss;
pub mod metrics;
pub mod optim;
pub mod pareto;
pub mod schedule;
pub mod train;

pub use loss::{mantis_loss, multitask_loss, Task};
pub use metrics::{metrics, Confusion, Metrics};
pub use optim::{Adam, AdamConfig};
pub use pareto::{pareto_front, pareto_indices, CheckpointRecord};
pub use schedule::{EvolveSchedule, ScheduleState, Stage, Transition};
pub use train::{evaluate, train, EpochLog, EvalSummary, TrainConfig, TrainReport};
